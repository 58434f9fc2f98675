//! Reverse-diffusion sampling with classifier-free guidance, keyframe
//! editing for both motion generators and imputation-mask construction.
//!
//! Every sample owns a noise stream derived from its seed, so a sample does
//! not depend on which other samples share its batch.

pub mod masks;

#[cfg(test)]
mod tests;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::motion::{MotionError, MotionKind, MotionSequence, DEFAULT_FPS};
use crate::data::toy::stream_rng;
use crate::denoiser::{ConditionSet, DenoiserError, DenoiserModel, Style, Variant};
use crate::diffusion::{
    cfg_combine, standard_normal, DiffusionError, DiffusionSchedule, GuidanceConfig, ReverseKernel,
};
use crate::tensor::Tensor;

pub use masks::{make_inbetween_mask, make_keyframe_mask};

/// Boundary-to-interior velocity ratio above which an edit is flagged.
pub const BOUNDARY_WARNING_RATIO: f64 = 3.0;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("{operation} needs a {expected} model, got {got}")]
    Variant {
        operation: &'static str,
        expected: &'static str,
        got: &'static str,
    },
    #[error("mask: {0}")]
    Mask(String),
    #[error("{what}: expected {expected} frames, got {got}")]
    Frames {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("sample count must be at least 1")]
    Count,
    #[error("nothing to sample")]
    EmptyBatch,
    #[error(transparent)]
    Model(#[from] DenoiserError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Motion(#[from] MotionError),
}

type Result<T> = std::result::Result<T, SamplingError>;

/// Known frames of a sequence: values `[N, C]` are read where `mask = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputationSpec {
    mask: Vec<f32>,
    values: Tensor,
}

impl ImputationSpec {
    pub fn new(mask: Vec<f32>, values: Tensor) -> Result<Self> {
        let [n, c] = values.shape()[..] else {
            return Err(SamplingError::Mask(format!(
                "values must be [N, C], got {:?}",
                values.shape()
            )));
        };
        if mask.len() != n {
            return Err(SamplingError::Frames {
                what: "imputation mask",
                expected: n,
                got: mask.len(),
            });
        }
        if let Some(v) = mask.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(SamplingError::Mask(format!(
                "entries must be 0 or 1, found {v}"
            )));
        }
        for (i, &m) in mask.iter().enumerate() {
            if m == 1.0
                && values.data()[i * c..(i + 1) * c]
                    .iter()
                    .any(|v| !v.is_finite())
            {
                return Err(SamplingError::Mask(format!(
                    "frame {i} is masked but not finite"
                )));
            }
        }
        Ok(Self { mask, values })
    }

    /// No known frames.
    pub fn empty(n: usize, c: usize) -> Self {
        Self {
            mask: vec![0.0; n],
            values: Tensor::zeros(&[n, c]),
        }
    }

    /// Keeps `base` at the masked frames.
    pub fn from_sequence(base: &MotionSequence, mask: Vec<f32>) -> Result<Self> {
        Self::new(mask, base.data().clone())
    }

    /// Individual keyframes `(frame, values)` on an otherwise free sequence.
    pub fn from_keyframes(n: usize, c: usize, keys: &[(usize, Vec<f32>)]) -> Result<Self> {
        let mut mask = vec![0.0; n];
        let mut values = Tensor::zeros(&[n, c]);
        for (frame, v) in keys {
            if *frame >= n || v.len() != c {
                return Err(SamplingError::Mask(format!(
                    "keyframe at {frame} with {} values for a {n}x{c} sequence",
                    v.len()
                )));
            }
            mask[*frame] = 1.0;
            values.data_mut()[frame * c..(frame + 1) * c].copy_from_slice(v);
        }
        Self::new(mask, values)
    }

    pub fn mask(&self) -> &[f32] {
        &self.mask
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn frames(&self) -> usize {
        self.mask.len()
    }

    pub fn channels(&self) -> usize {
        self.values.dim(1)
    }

    pub fn known_frames(&self) -> usize {
        self.mask.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.known_frames() == 0
    }
}

/// A batch of unconstrained facial samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    pub frames: usize,
    pub cond: ConditionSet,
    pub guidance: GuidanceConfig,
    pub seed: u64,
    pub count: usize,
    pub fps: f32,
}

impl SampleRequest {
    pub fn new(cond: ConditionSet, seed: u64, count: usize) -> Self {
        Self {
            frames: cond.audio.dim(0),
            cond,
            guidance: GuidanceConfig::default(),
            seed,
            count,
            fps: DEFAULT_FPS,
        }
    }
}

/// How known head frames enter the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputationMode {
    /// Clean values with guidance flag 1, and the estimate re-masked with
    /// the known values before every reverse step.
    #[default]
    Guided,
    /// Noised values written over `y_t` with flag 0; known frames are only
    /// restored in the final output.
    Replacement,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditOptions {
    pub kernel: ReverseKernel,
    /// Copy the known values into the finished sample.
    pub final_replacement: bool,
    pub fps: f32,
}

impl Default for EditOptions {
    fn default() -> Self {
        Self {
            kernel: ReverseKernel::Posterior,
            final_replacement: true,
            fps: DEFAULT_FPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadOptions {
    pub kernel: ReverseKernel,
    pub mode: ImputationMode,
    pub fps: f32,
}

impl Default for HeadOptions {
    fn default() -> Self {
        Self {
            kernel: ReverseKernel::Posterior,
            mode: ImputationMode::Guided,
            fps: DEFAULT_FPS,
        }
    }
}

/// Velocity jump at mask boundaries relative to the generated region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReport {
    /// Largest frame-to-frame step that crosses a boundary.
    pub max_boundary_step: f64,
    /// Median step between two generated frames.
    pub median_interior_step: f64,
    /// `None` without a boundary or a generated interior.
    pub ratio: Option<f64>,
    pub warning: bool,
}

/// Frame steps are L2 norms of consecutive-frame differences.
pub fn boundary_smoothness(data: &Tensor, mask: &[f32]) -> BoundaryReport {
    let c = data.dim(1);
    let d = data.data();
    let step = |i: usize| -> f64 {
        (0..c)
            .map(|k| (d[(i + 1) * c + k] as f64 - d[i * c + k] as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut boundary: f64 = 0.0;
    let mut crossings = 0;
    let mut interior = Vec::new();
    for i in 0..mask.len().saturating_sub(1) {
        if mask[i] != mask[i + 1] {
            boundary = boundary.max(step(i));
            crossings += 1;
        } else if mask[i] == 0.0 {
            interior.push(step(i));
        }
    }
    interior.sort_by(f64::total_cmp);
    let median = match interior.len() {
        0 => f64::NAN,
        k if k % 2 == 1 => interior[k / 2],
        k => 0.5 * (interior[k / 2 - 1] + interior[k / 2]),
    };
    let ratio = (crossings > 0 && !interior.is_empty()).then(|| boundary / median.max(1e-12));
    BoundaryReport {
        max_boundary_step: boundary,
        median_interior_step: median,
        ratio,
        warning: ratio.is_some_and(|r| r > BOUNDARY_WARNING_RATIO),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOutcome {
    pub sequence: MotionSequence,
    pub boundary: BoundaryReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutcome {
    pub sequence: MotionSequence,
    pub boundary: BoundaryReport,
    /// Mean squared error between the network's clean estimate and the known
    /// values at masked frames, before any re-masking, one entry per step
    /// from `t = T` down to `t = 1`. Empty without known frames.
    pub pre_replacement_mse: Vec<f64>,
}

impl HeadOutcome {
    pub fn mean_pre_replacement_mse(&self) -> Option<f64> {
        let v = &self.pre_replacement_mse;
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// One facial edit in a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EditJob {
    pub spec: ImputationSpec,
    pub cond: ConditionSet,
    pub seed: u64,
}

/// One head sample in a batch; an empty spec means pure synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadJob {
    pub audio: Tensor,
    pub spec: ImputationSpec,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Injection {
    None,
    /// `q_sample` of the known values replaces `x_t`, flag row 0 if present.
    Noised,
    /// Clean values with flag 1 and re-masked estimates.
    Flagged,
}

struct Lane {
    /// `[A, N]`.
    audio: Vec<f32>,
    style: Style,
    /// Per-frame mask and `[C, N]` known values.
    mask: Vec<f32>,
    known: Vec<f32>,
    rng: ChaCha8Rng,
}

struct LoopConfig {
    guidance: GuidanceConfig,
    kernel: ReverseKernel,
    injection: Injection,
    final_replacement: bool,
    record_pre: bool,
}

fn normal_row(len: usize, rng: &mut impl Rng) -> Vec<f32> {
    standard_normal(&[len], rng).data().to_vec()
}

/// Shared reverse loop over lanes of equal length. Returns each lane's
/// `[C, N]` result and its pre-replacement error trace.
fn reverse_loop(
    model: &DenoiserModel,
    schedule: &DiffusionSchedule,
    n: usize,
    mut lanes: Vec<Lane>,
    cfg: LoopConfig,
) -> Result<Vec<(Vec<f32>, Vec<f64>)>> {
    let b = lanes.len();
    if b == 0 {
        return Err(SamplingError::EmptyBatch);
    }
    let arch = model.arch();
    let c = arch.motion_channels;
    let c_in = arch.input_channels();
    let flagged = c_in == c + 1;
    let a = arch.audio_in;
    for lane in &lanes {
        if lane.audio.len() != a * n {
            return Err(DenoiserError::AudioChannels {
                expected: a,
                got: lane.audio.len() / n.max(1),
            }
            .into());
        }
    }
    let uncond = !cfg.guidance.is_conditional_only();
    let rows = if uncond { 2 * b } else { b };
    let mut audio = Vec::with_capacity(rows * a * n);
    for _ in 0..rows / b {
        for lane in &lanes {
            audio.extend_from_slice(&lane.audio);
        }
    }
    let audio = Tensor::new(vec![rows, a, n], audio).map_err(DenoiserError::from)?;
    let null: Vec<bool> = (0..rows).map(|r| r >= b).collect();
    let styles: Vec<Style> = (0..rows).map(|r| lanes[r % b].style).collect();

    let mut x: Vec<Vec<f32>> = lanes
        .iter_mut()
        .map(|l| normal_row(c * n, &mut l.rng))
        .collect();
    let mut traces = vec![Vec::new(); b];
    for t in (1..=schedule.steps()).rev() {
        let mut input = Vec::with_capacity(rows * c_in * n);
        for (lane, xl) in lanes.iter_mut().zip(&x) {
            match cfg.injection {
                Injection::None => input.extend_from_slice(xl),
                Injection::Noised => {
                    let eps = Tensor::from_parts(vec![c * n], normal_row(c * n, &mut lane.rng));
                    let known = Tensor::from_parts(vec![c * n], lane.known.clone());
                    let noised = schedule.q_sample(&known, t, &eps)?;
                    input.extend(select(&lane.mask, noised.data(), xl, c, n));
                }
                Injection::Flagged => input.extend(select(&lane.mask, &lane.known, xl, c, n)),
            }
            if flagged {
                match cfg.injection {
                    Injection::Flagged => input.extend_from_slice(&lane.mask),
                    _ => input.extend(std::iter::repeat_n(0.0, n)),
                }
            }
        }
        if uncond {
            input.extend_from_within(..);
        }
        let input = Tensor::from_parts(vec![rows, c_in, n], input);
        let ts = vec![t; rows];
        let pred = model.predict_batch(&input, &ts, &audio, &null, &styles)?;
        let pd = pred.data();
        let per = c * n;
        for (i, lane) in lanes.iter_mut().enumerate() {
            let cond = Tensor::from_parts(vec![per], pd[i * per..(i + 1) * per].to_vec());
            let mut x0 = if uncond {
                let u =
                    Tensor::from_parts(vec![per], pd[(b + i) * per..(b + i + 1) * per].to_vec());
                cfg_combine(&u, &cond, cfg.guidance)?
            } else {
                cond
            };
            if cfg.record_pre && lane.mask.contains(&1.0) {
                traces[i].push(masked_mse(x0.data(), &lane.known, &lane.mask, c, n));
            }
            if cfg.injection == Injection::Flagged {
                let remasked = select(&lane.mask, &lane.known, x0.data(), c, n);
                x0 = Tensor::from_parts(vec![per], remasked);
            }
            let noise = if t > 1 {
                normal_row(per, &mut lane.rng)
            } else {
                vec![0.0; per]
            };
            let xt = Tensor::from_parts(vec![per], std::mem::take(&mut x[i]));
            let noise = Tensor::from_parts(vec![per], noise);
            x[i] = schedule
                .posterior_step(cfg.kernel, &xt, &x0, t, &noise)?
                .data()
                .to_vec();
        }
    }
    Ok(lanes
        .iter()
        .zip(x)
        .zip(traces)
        .map(|((lane, xl), tr)| {
            let out = if cfg.final_replacement {
                select(&lane.mask, &lane.known, &xl, c, n)
            } else {
                xl
            };
            (out, tr)
        })
        .collect())
}

/// Per channel-first entry: `known` where the frame's mask is 1, else `free`.
fn select(mask: &[f32], known: &[f32], free: &[f32], c: usize, n: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(c * n);
    for ch in 0..c {
        let row = ch * n..(ch + 1) * n;
        out.extend(
            known[row.clone()]
                .iter()
                .zip(&free[row])
                .zip(mask)
                .map(|((&k, &f), &m)| if m == 1.0 { k } else { f }),
        );
    }
    out
}

fn masked_mse(pred: &[f32], known: &[f32], mask: &[f32], c: usize, n: usize) -> f64 {
    let mut s = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for i in 0..n {
            if mask[i] == 1.0 {
                s += (pred[ch * n + i] as f64 - known[ch * n + i] as f64).powi(2);
                count += 1;
            }
        }
    }
    s / count.max(1) as f64
}

fn require(model: &DenoiserModel, variant: Variant, operation: &'static str) -> Result<()> {
    if model.variant() != variant {
        return Err(SamplingError::Variant {
            operation,
            expected: variant.name(),
            got: model.variant().name(),
        });
    }
    Ok(())
}

fn style_name(model: &DenoiserModel, style: Style) -> String {
    match style {
        Style::Subject(i) => model.arch().subjects.get(i).cloned().unwrap_or_default(),
        Style::Mean => "mean".into(),
    }
}

fn to_sequence(
    kind: MotionKind,
    fps: f32,
    subject: String,
    cf: Vec<f32>,
    c: usize,
    n: usize,
) -> Result<MotionSequence> {
    let data = Tensor::from_parts(vec![c, n], cf).transpose2();
    Ok(MotionSequence::new(kind, fps, subject, data)?)
}

fn lane_audio(audio: &Tensor, n: usize, what: &'static str) -> Result<Vec<f32>> {
    if audio.rank() != 2 || audio.dim(0) != n {
        return Err(SamplingError::Frames {
            what,
            expected: n,
            got: if audio.rank() == 2 { audio.dim(0) } else { 0 },
        });
    }
    Ok(audio.transpose2().data().to_vec())
}

/// Draws `req.count` facial sequences from pure noise. Sample `i` uses the
/// noise stream `(seed, i)`.
pub fn sample_facial(
    model: &DenoiserModel,
    schedule: &DiffusionSchedule,
    req: &SampleRequest,
    kernel: ReverseKernel,
) -> Result<Vec<MotionSequence>> {
    require(model, Variant::Facial, "facial sampling")?;
    if req.count == 0 {
        return Err(SamplingError::Count);
    }
    let n = req.frames;
    let audio = if req.cond.null {
        vec![0.0; model.arch().audio_in * n]
    } else {
        lane_audio(&req.cond.audio, n, "audio condition")?
    };
    let c = model.arch().motion_channels;
    let lanes = (0..req.count)
        .map(|i| Lane {
            audio: audio.clone(),
            style: req.cond.style,
            mask: vec![0.0; n],
            known: vec![0.0; c * n],
            rng: stream_rng(req.seed, i as u64),
        })
        .collect();
    let cfg = LoopConfig {
        guidance: req.guidance,
        kernel,
        injection: Injection::None,
        final_replacement: false,
        record_pre: false,
    };
    let subject = style_name(model, req.cond.style);
    reverse_loop(model, schedule, n, lanes, cfg)?
        .into_iter()
        .map(|(x, _)| to_sequence(MotionKind::Face, req.fps, subject.clone(), x, c, n))
        .collect()
}

/// Regenerates the unmasked frames of a facial sequence. Known frames are
/// noised to the current level and written over `x_t` before each step.
pub fn edit_facial(
    model: &DenoiserModel,
    schedule: &DiffusionSchedule,
    spec: &ImputationSpec,
    cond: &ConditionSet,
    guidance: GuidanceConfig,
    seed: u64,
    opts: &EditOptions,
) -> Result<EditOutcome> {
    let job = EditJob {
        spec: spec.clone(),
        cond: cond.clone(),
        seed,
    };
    Ok(edit_facial_batch(model, schedule, &[job], guidance, opts)?.remove(0))
}

/// [`edit_facial`] over jobs of equal length in one batch.
pub fn edit_facial_batch(
    model: &DenoiserModel,
    schedule: &DiffusionSchedule,
    jobs: &[EditJob],
    guidance: GuidanceConfig,
    opts: &EditOptions,
) -> Result<Vec<EditOutcome>> {
    require(model, Variant::Facial, "facial editing")?;
    let n = jobs.first().ok_or(SamplingError::EmptyBatch)?.spec.frames();
    let c = model.arch().motion_channels;
    let mut lanes = Vec::with_capacity(jobs.len());
    for job in jobs {
        check_spec(&job.spec, n, c)?;
        let audio = if job.cond.null {
            vec![0.0; model.arch().audio_in * n]
        } else {
            lane_audio(&job.cond.audio, n, "audio condition")?
        };
        lanes.push(Lane {
            audio,
            style: job.cond.style,
            mask: job.spec.mask.clone(),
            known: job.spec.values.transpose2().data().to_vec(),
            rng: stream_rng(job.seed, 0),
        });
    }
    let cfg = LoopConfig {
        guidance,
        kernel: opts.kernel,
        injection: Injection::Noised,
        final_replacement: opts.final_replacement,
        record_pre: false,
    };
    reverse_loop(model, schedule, n, lanes, cfg)?
        .into_iter()
        .zip(jobs)
        .map(|((x, _), job)| {
            let seq = to_sequence(
                MotionKind::Face,
                opts.fps,
                style_name(model, job.cond.style),
                x,
                c,
                n,
            )?;
            let boundary = boundary_smoothness(seq.data(), job.spec.mask());
            Ok(EditOutcome {
                sequence: seq,
                boundary,
            })
        })
        .collect()
}

fn check_spec(spec: &ImputationSpec, n: usize, c: usize) -> Result<()> {
    if spec.frames() != n {
        return Err(SamplingError::Frames {
            what: "batched imputation spec",
            expected: n,
            got: spec.frames(),
        });
    }
    if spec.channels() != c {
        return Err(DenoiserError::Channels {
            expected: c,
            got: spec.channels(),
        }
        .into());
    }
    Ok(())
}

/// Head synthesis and editing with guidance flags. Frames with `mask = 1`
/// in the output equal the known values exactly.
pub fn sample_head_sgdiff(
    model: &DenoiserModel,
    schedule: &DiffusionSchedule,
    audio: &Tensor,
    spec: &ImputationSpec,
    guidance: GuidanceConfig,
    seed: u64,
    opts: &HeadOptions,
) -> Result<HeadOutcome> {
    let job = HeadJob {
        audio: audio.clone(),
        spec: spec.clone(),
        seed,
    };
    Ok(sample_head_batch(model, schedule, &[job], guidance, opts)?.remove(0))
}

/// [`sample_head_sgdiff`] over jobs of equal length in one batch.
pub fn sample_head_batch(
    model: &DenoiserModel,
    schedule: &DiffusionSchedule,
    jobs: &[HeadJob],
    guidance: GuidanceConfig,
    opts: &HeadOptions,
) -> Result<Vec<HeadOutcome>> {
    require(model, Variant::Head, "head sampling")?;
    let n = jobs.first().ok_or(SamplingError::EmptyBatch)?.spec.frames();
    let c = model.arch().motion_channels;
    let mut lanes = Vec::with_capacity(jobs.len());
    for job in jobs {
        check_spec(&job.spec, n, c)?;
        lanes.push(Lane {
            audio: lane_audio(&job.audio, n, "audio condition")?,
            style: Style::Mean,
            mask: job.spec.mask.clone(),
            known: job.spec.values.transpose2().data().to_vec(),
            rng: stream_rng(job.seed, 0),
        });
    }
    let injection = match opts.mode {
        ImputationMode::Guided => Injection::Flagged,
        ImputationMode::Replacement => Injection::Noised,
    };
    let cfg = LoopConfig {
        guidance,
        kernel: opts.kernel,
        injection,
        final_replacement: true,
        record_pre: true,
    };
    reverse_loop(model, schedule, n, lanes, cfg)?
        .into_iter()
        .zip(jobs)
        .map(|((x, trace), job)| {
            let seq = to_sequence(MotionKind::Head, opts.fps, "mean".into(), x, c, n)?;
            let boundary = boundary_smoothness(seq.data(), job.spec.mask());
            Ok(HeadOutcome {
                sequence: seq,
                boundary,
                pre_replacement_mse: trace,
            })
        })
        .collect()
}
