use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::loss::{record_losses, LossError};
use super::masks::GuidanceMaskSampler;
use crate::autograd::Graph;
use crate::data::toy::ToyCorpus;
use crate::denoiser::model::zero_rows;
use crate::denoiser::{DenoiserError, DenoiserModel, Style, Variant};
use crate::diffusion::{
    standard_normal, DiffusionError, DiffusionSchedule, DiffusionSpec, ScheduleKind, DEFAULT_STEPS,
};
use crate::optim::{AdamConfig, AdamState, OptimError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyCorpus,
    #[error("window of {window} frames exceeds the longest clip ({longest})")]
    WindowTooLong { window: usize, longest: usize },
    #[error("non-finite loss at iteration {iteration} (simple {simple}, velocity {velocity}, mask {mask})")]
    NonFinite {
        iteration: usize,
        simple: f64,
        velocity: f64,
        mask: f64,
    },
    #[error("loss {loss:.4} at iteration {iteration} exceeds {factor}x the initial {initial:.4}")]
    Diverged {
        iteration: usize,
        loss: f64,
        initial: f64,
        factor: f64,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] DenoiserError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub window: usize,
    /// Probability of zeroing a sample's audio condition.
    pub cond_dropout: f64,
    pub lambda_vel: f64,
    pub lambda_mask: f64,
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub seed: u64,
    /// Abort once a batch loss exceeds this multiple of the first one.
    pub divergence_factor: f64,
}

impl TrainConfig {
    pub fn facial() -> Self {
        Self {
            iterations: 2000,
            batch_size: 64,
            lr: 1e-4,
            window: 30,
            cond_dropout: 0.1,
            lambda_vel: 10.0,
            lambda_mask: 1.0,
            steps: DEFAULT_STEPS,
            schedule: ScheduleKind::Cosine,
            seed: 0,
            divergence_factor: 10.0,
        }
    }

    pub fn head() -> Self {
        Self {
            window: 300,
            ..Self::facial()
        }
    }

    pub fn finetune() -> Self {
        Self {
            iterations: 500,
            ..Self::facial()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if self.window < 2 {
            return Err(TrainError::Config("window needs at least 2 frames".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(TrainError::Config("dropout must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule, TrainError> {
        Ok(DiffusionSchedule::new(self.steps as i64, self.schedule)?)
    }
}

/// A motion clip with aligned audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    /// `[N, C]`.
    pub motion: Tensor,
    /// `[N, audio_in]`.
    pub audio: Tensor,
    pub style: Style,
}

impl Clip {
    pub fn frames(&self) -> usize {
        self.motion.dim(0)
    }

    /// Frames `start..start + len` of motion and audio.
    pub fn crop(&self, start: usize, len: usize) -> Clip {
        let cut = |t: &Tensor| {
            let c = t.dim(1);
            Tensor::new(
                vec![len, c],
                t.data()[start * c..(start + len) * c].to_vec(),
            )
            .expect("crop in range")
        };
        Clip {
            motion: cut(&self.motion),
            audio: cut(&self.audio),
            style: self.style,
        }
    }
}

pub fn facial_clips(corpus: &ToyCorpus) -> Vec<Clip> {
    corpus
        .items
        .iter()
        .map(|it| Clip {
            motion: it.face.data().clone(),
            audio: it.features.data.clone(),
            style: Style::Subject(it.subject),
        })
        .collect()
}

pub fn head_clips(corpus: &ToyCorpus) -> Vec<Clip> {
    corpus
        .items
        .iter()
        .map(|it| Clip {
            motion: it.head.data().clone(),
            audio: it.features.data.clone(),
            style: Style::Mean,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub simple: f64,
    pub velocity: f64,
    pub mask: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub records: Vec<LossRecord>,
}

impl LossHistory {
    /// Mean total loss over the first `window` records.
    pub fn initial(&self, window: usize) -> f64 {
        mean_total(&self.records[..window.min(self.records.len())])
    }

    /// Mean total loss over the last `window` records.
    pub fn last(&self, window: usize) -> f64 {
        let k = self.records.len().saturating_sub(window);
        mean_total(&self.records[k..])
    }

    /// Writes `iteration loss_simple loss_vel loss_mask` lines.
    pub fn write(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut f = fs::File::create(path)?;
        writeln!(f, "# iteration loss_simple loss_vel loss_mask")?;
        for r in &self.records {
            writeln!(
                f,
                "{} {:.8} {:.8} {:.8}",
                r.iteration, r.simple, r.velocity, r.mask
            )?;
        }
        Ok(())
    }
}

fn mean_total(rs: &[LossRecord]) -> f64 {
    if rs.is_empty() {
        return f64::NAN;
    }
    rs.iter().map(|r| r.total).sum::<f64>() / rs.len() as f64
}

/// Network input with guidance injection: frames with `mask = 1` carry the
/// clean signal and flag 1, the rest carry the noisy signal and flag 0.
/// Inputs and output are channels-first: `y_t`, `y0` are `[C, N]`, the
/// result is `[C + 1, N]`.
pub fn mix_guidance(y_t: &[f32], y0: &[f32], mask: &[f32], c: usize) -> Vec<f32> {
    let n = mask.len();
    let mut out = Vec::with_capacity((c + 1) * n);
    for ch in 0..c {
        let row = ch * n..(ch + 1) * n;
        out.extend(
            y_t[row.clone()]
                .iter()
                .zip(&y0[row])
                .zip(mask)
                .map(|((&noisy, &clean), &m)| if m == 1.0 { clean } else { noisy }),
        );
    }
    out.extend_from_slice(mask);
    out
}

/// One assembled training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, C_in, W]` network input.
    pub input: Tensor,
    /// `[B, C, W]` clean target.
    pub target: Tensor,
    /// `[B, A, W]`, zeroed for dropped conditions.
    pub audio: Tensor,
    pub t: Vec<usize>,
    pub styles: Vec<Style>,
    /// `[B, C, W]` per-frame mask broadcast over channels (head only).
    pub mask: Option<Tensor>,
}

/// Owns a model and its optimizer for a training run.
pub struct Trainer {
    pub model: DenoiserModel,
    pub config: TrainConfig,
    pub history: LossHistory,
    schedule: DiffusionSchedule,
    adam: AdamState<f32>,
    rng: ChaCha8Rng,
    sampler: Option<GuidanceMaskSampler>,
    first_loss: Option<f64>,
    iteration: usize,
}

impl Trainer {
    pub fn new(
        model: DenoiserModel,
        config: TrainConfig,
        sampler: Option<GuidanceMaskSampler>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let schedule = config.schedule()?;
        let mut model = model;
        model.set_diffusion(DiffusionSpec {
            steps: config.steps,
            schedule: config.schedule,
        });
        let adam = AdamState::new(
            model.params(),
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
        )?;
        if sampler.is_some() && model.variant() != Variant::Head {
            return Err(DenoiserError::Variant {
                expected: "head",
                got: model.variant().name(),
            }
            .into());
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_696e),
            model,
            config,
            history: LossHistory::default(),
            schedule,
            adam,
            sampler,
            first_loss: None,
            iteration: 0,
        })
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    /// Random crops, steps, noise, dropout and guidance masks for one step.
    pub fn sample_batch(&mut self, clips: &[Clip]) -> Result<Batch, TrainError> {
        let w = self.config.window;
        let eligible: Vec<&Clip> = clips.iter().filter(|c| c.frames() >= w).collect();
        if clips.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        if eligible.is_empty() {
            return Err(TrainError::WindowTooLong {
                window: w,
                longest: clips.iter().map(Clip::frames).max().unwrap_or(0),
            });
        }
        let arch = self.model.arch();
        let c = arch.motion_channels;
        let c_in = arch.input_channels();
        let a = arch.audio_in;
        let head = self.sampler.is_some() || self.model.variant() == Variant::Head;
        let b = self.config.batch_size;
        let mut input = Vec::with_capacity(b * c_in * w);
        let mut target = Vec::with_capacity(b * c * w);
        let mut audio = Vec::with_capacity(b * a * w);
        let mut mask_all = Vec::with_capacity(if head { b * c * w } else { 0 });
        let mut ts = Vec::with_capacity(b);
        let mut styles = Vec::with_capacity(b);
        let mut null = Vec::with_capacity(b);
        for _ in 0..b {
            let clip = eligible[self.rng.random_range(0..eligible.len())];
            let start = self.rng.random_range(0..=clip.frames() - w);
            let crop = clip.crop(start, w);
            if crop.motion.dim(1) != c {
                return Err(DenoiserError::Channels {
                    expected: c,
                    got: crop.motion.dim(1),
                }
                .into());
            }
            let x0 = crop.motion.transpose2();
            let t = self.rng.random_range(1..=self.schedule.steps());
            let eps = standard_normal(&[c, w], &mut self.rng);
            let x_t = self.schedule.q_sample(&x0, t, &eps)?;
            if head {
                let m = match &self.sampler {
                    Some(s) => s.sample(w, &mut self.rng),
                    None => vec![0.0; w],
                };
                input.extend(mix_guidance(x_t.data(), x0.data(), &m, c));
                for _ in 0..c {
                    mask_all.extend_from_slice(&m);
                }
            } else {
                input.extend_from_slice(x_t.data());
            }
            target.extend_from_slice(x0.data());
            audio.extend_from_slice(crop.audio.transpose2().data());
            ts.push(t);
            styles.push(crop.style);
            null.push(self.rng.random_bool(self.config.cond_dropout));
        }
        let audio = zero_rows(Tensor::from_parts(vec![b, a, w], audio), &null);
        Ok(Batch {
            input: Tensor::from_parts(vec![b, c_in, w], input),
            target: Tensor::from_parts(vec![b, c, w], target),
            audio,
            t: ts,
            styles,
            mask: head.then(|| Tensor::from_parts(vec![b, c, w], mask_all)),
        })
    }

    /// Forward, backward and one Adam update on `batch`.
    pub fn step_on(&mut self, batch: &Batch) -> Result<LossRecord, TrainError> {
        let model = &self.model;
        let mut g = Graph::<f32>::new();
        let p = model.params().bind(&mut g);
        let x = g.constant(batch.input.clone());
        let av = g.constant(batch.audio.clone());
        let sv = match model.variant() {
            Variant::Facial => Some(g.constant(model.style_weights(&batch.styles)?)),
            Variant::Head => None,
        };
        let pred = model.build(&mut g, &p, x, &batch.t, av, sv)?;
        let target = g.constant(batch.target.clone());
        let mask = match (&batch.mask, self.sampler.is_some()) {
            (Some(m), true) => Some((g.constant(m.clone()), self.config.lambda_mask)),
            _ => None,
        };
        let nodes = record_losses(&mut g, pred, target, self.config.lambda_vel, mask)?;
        let record = LossRecord {
            iteration: self.iteration,
            simple: g.value(nodes.simple).item() as f64,
            velocity: g.value(nodes.velocity).item() as f64,
            mask: nodes.mask.map_or(0.0, |m| g.value(m).item() as f64),
            total: g.value(nodes.total).item() as f64,
        };
        if !record.total.is_finite() {
            return Err(TrainError::NonFinite {
                iteration: self.iteration,
                simple: record.simple,
                velocity: record.velocity,
                mask: record.mask,
            });
        }
        let initial = *self.first_loss.get_or_insert(record.total);
        if record.total > self.config.divergence_factor * initial {
            return Err(TrainError::Diverged {
                iteration: self.iteration,
                loss: record.total,
                initial,
                factor: self.config.divergence_factor,
            });
        }
        let grads = g.backward(nodes.total).map_err(DenoiserError::from)?;
        let grads = grads.params(self.model.params().len());
        self.adam.step(self.model.params_mut(), &grads)?;
        self.history.records.push(record);
        self.iteration += 1;
        Ok(record)
    }

    pub fn step(&mut self, clips: &[Clip]) -> Result<LossRecord, TrainError> {
        let batch = self.sample_batch(clips)?;
        self.step_on(&batch)
    }

    /// Runs the configured number of iterations.
    pub fn run(&mut self, clips: &[Clip]) -> Result<(), TrainError> {
        self.run_with(clips, |_| {})
    }

    pub fn run_with(
        &mut self,
        clips: &[Clip],
        mut on_step: impl FnMut(&LossRecord),
    ) -> Result<(), TrainError> {
        while self.iteration < self.config.iterations {
            let r = self.step(clips)?;
            on_step(&r);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DenoiserModel,
    pub history: LossHistory,
}

/// Facial training on random windows with condition dropout.
pub fn train_facial(
    clips: &[Clip],
    model: DenoiserModel,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if model.variant() != Variant::Facial {
        return Err(DenoiserError::Variant {
            expected: "facial",
            got: model.variant().name(),
        }
        .into());
    }
    let mut tr = Trainer::new(model, config.clone(), None)?;
    tr.run(clips)?;
    Ok(TrainOutcome {
        model: tr.model,
        history: tr.history,
    })
}

/// Head training with guidance injection and the mask loss.
pub fn train_head_sgdiff(
    clips: &[Clip],
    model: DenoiserModel,
    config: &TrainConfig,
    sampler: GuidanceMaskSampler,
) -> Result<TrainOutcome, TrainError> {
    let mut tr = Trainer::new(model, config.clone(), Some(sampler))?;
    tr.run(clips)?;
    Ok(TrainOutcome {
        model: tr.model,
        history: tr.history,
    })
}

/// Adapts every parameter to a new subject, learning a fresh style
/// embedding. Zero iterations return the model untouched.
pub fn finetune_personalize(
    model: &DenoiserModel,
    reference: &[(Tensor, Tensor)],
    subject: &str,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if reference.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if config.iterations == 0 {
        return Ok(TrainOutcome {
            model: model.clone(),
            history: LossHistory::default(),
        });
    }
    let mut m = model.clone();
    let idx = match m.subject_index(subject) {
        Some(i) => i,
        None => m.add_subject(subject)?,
    };
    let clips: Vec<Clip> = reference
        .iter()
        .map(|(motion, audio)| Clip {
            motion: motion.clone(),
            audio: audio.clone(),
            style: Style::Subject(idx),
        })
        .collect();
    train_facial(&clips, m, config)
}

/// Mean squared error of x0 predictions on a fixed grid of steps and noise
/// draws. With `t_grid` and `seed` fixed it compares models on equal terms.
pub fn denoising_error(
    model: &DenoiserModel,
    clips: &[Clip],
    schedule: &DiffusionSchedule,
    t_grid: &[usize],
    seed: u64,
) -> Result<f64, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for clip in clips {
        let x0 = clip.motion.transpose2();
        let (c, n) = (x0.dim(0), x0.dim(1));
        for &t in t_grid {
            let eps = standard_normal(&[c, n], &mut rng);
            let x_t = self_flagged(model, &schedule.q_sample(&x0, t, &eps)?);
            let audio = clip.audio.transpose2();
            let a = audio.dim(0);
            let pred = model.predict_batch(
                &x_t.reshape(&[1, model.arch().input_channels(), n])?,
                &[t],
                &audio.reshape(&[1, a, n])?,
                &[false],
                &[clip.style],
            )?;
            for (p, q) in pred.data().iter().zip(x0.data()) {
                total += ((p - q) as f64).powi(2);
            }
            count += c * n;
        }
    }
    Ok(total / count as f64)
}

/// Appends an all-zero flag row for head models.
fn self_flagged(model: &DenoiserModel, x_t: &Tensor) -> Tensor {
    if model.variant() == Variant::Facial {
        return x_t.clone();
    }
    let n = x_t.dim(1);
    let mut d = x_t.data().to_vec();
    d.extend(std::iter::repeat_n(0.0, n));
    Tensor::from_parts(vec![x_t.dim(0) + 1, n], d)
}

impl From<crate::tensor::ShapeError> for TrainError {
    fn from(e: crate::tensor::ShapeError) -> Self {
        TrainError::Model(e.into())
    }
}
