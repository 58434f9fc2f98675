//! Synthetic speech-like features with correlated face and head motion.
//!
//! Features are syllable envelopes modulating band-limited carriers. Face
//! motion is a per-subject affine readout of temporally smoothed features
//! plus a random-sign residual that changes per segment, so the same
//! features admit several plausible motions. Head pitch follows the
//! smoothed feature energy, which produces nods near syllable peaks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::io::FeatureTrack;
use super::motion::{MotionKind, MotionSequence, DEFAULT_FPS};
use crate::tensor::Tensor;

pub const DEFAULT_VERTICES: usize = 16;
pub const FEATURE_DIM: usize = 64;
const CARRIERS: usize = 4;
const RESIDUAL_SEGMENT: usize = 20;
const RESIDUAL_RAMP: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectStyle {
    pub name: String,
    pub amplitude: f32,
    /// Moving-average length applied to features before readout.
    pub smoothing: usize,
    /// Scale of the subject's constant per-channel offset.
    pub offset: f32,
}

impl SubjectStyle {
    pub fn new(name: &str, amplitude: f32, smoothing: usize, offset: f32) -> Self {
        Self {
            name: name.to_string(),
            amplitude,
            smoothing,
            offset,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpusSpec {
    /// Sequences generated for each subject.
    pub sequences_per_subject: usize,
    pub frames: usize,
    pub vertices: usize,
    pub fps: f32,
    pub seed: u64,
    pub subjects: Vec<SubjectStyle>,
    /// Scale of every stochastic motion component; 0 makes motion a
    /// deterministic function of the features.
    pub noise: f32,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self {
            sequences_per_subject: 12,
            frames: 300,
            vertices: DEFAULT_VERTICES,
            fps: DEFAULT_FPS,
            seed: 0,
            subjects: vec![
                SubjectStyle::new("s0", 1.0, 5, 0.3),
                SubjectStyle::new("s1", 0.8, 3, -0.2),
                SubjectStyle::new("s2", 1.2, 7, 0.1),
            ],
            noise: 0.35,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToyError {
    #[error("invalid corpus spec: {0}")]
    Spec(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub subject: usize,
    /// Features at the motion frame rate, `[N, 64]`.
    pub features: FeatureTrack,
    pub face: MotionSequence,
    pub head: MotionSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpus {
    pub spec: ToyCorpusSpec,
    pub items: Vec<CorpusItem>,
}

impl ToyCorpus {
    pub fn subject_names(&self) -> Vec<String> {
        self.spec.subjects.iter().map(|s| s.name.clone()).collect()
    }
}

/// Stream-separated generator: `(seed, stream)` pairs never share output.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Readout shared by every subject, drawn from the corpus seed only.
fn readout(channels: usize, seed: u64) -> Vec<f32> {
    let mut rng = stream_rng(seed, 0x5eed_0001);
    let scale = (1.0 / FEATURE_DIM as f64).sqrt() * 2.0;
    (0..channels * FEATURE_DIM)
        .map(|_| {
            ({
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            }) as f32
        })
        .collect()
}

fn direction(channels: usize, rng: &mut impl Rng) -> Vec<f32> {
    let v: Vec<f32> = (0..channels).map(|_| StandardNormal.sample(rng)).collect();
    let norm = (v.iter().map(|x| x * x).sum::<f32>() / channels as f32).sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn raised_cosine(x: f32, half_width: f32) -> f32 {
    if x.abs() >= half_width {
        0.0
    } else {
        0.5 * (1.0 + (std::f32::consts::PI * x / half_width).cos())
    }
}

/// Centered moving average along frames, truncated at the edges.
pub fn smooth_frames(data: &[f32], n: usize, c: usize, window: usize) -> Vec<f32> {
    if window <= 1 {
        return data.to_vec();
    }
    let half = window / 2;
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(n - 1);
        let inv = 1.0 / (hi - lo + 1) as f32;
        for j in lo..=hi {
            for k in 0..c {
                out[i * c + k] += data[j * c + k] * inv;
            }
        }
    }
    out
}

/// Envelope-modulated band-limited carriers, `[n, 64]` row-major.
pub fn synth_features(n: usize, fps: f32, rng: &mut impl Rng) -> Vec<f32> {
    let tau = std::f32::consts::TAU;
    let mut env = vec![0.15f32; n];
    let mut t = -rng.random_range(0.0..0.4f32);
    let duration = n as f32 / fps;
    while t < duration + 0.4 {
        let amp = rng.random_range(0.6..1.4f32);
        let half = rng.random_range(0.10..0.18f32);
        for (i, e) in env.iter_mut().enumerate() {
            *e += amp * raised_cosine(i as f32 / fps - t, half);
        }
        t += rng.random_range(0.22..0.45f32);
    }
    let mut carriers = Vec::with_capacity(FEATURE_DIM * CARRIERS);
    for _ in 0..FEATURE_DIM * CARRIERS {
        let freq = rng.random_range(0.5..4.0f32);
        let phase = rng.random_range(0.0..tau);
        carriers.push((freq, phase));
    }
    let gain = (2.0 / CARRIERS as f32).sqrt();
    let mut out = vec![0.0; n * FEATURE_DIM];
    for i in 0..n {
        let time = i as f32 / fps;
        for k in 0..FEATURE_DIM {
            // A constant component keeps the envelope visible in every channel.
            let mut v = 0.5;
            for &(freq, phase) in &carriers[k * CARRIERS..(k + 1) * CARRIERS] {
                v += gain * (tau * freq * time + phase).sin();
            }
            out[i * FEATURE_DIM + k] = env[i] * v;
        }
    }
    out
}

/// Smooth `+-1` sequence switching sign at random per segment.
fn segment_signs(n: usize, rng: &mut impl Rng) -> Vec<f32> {
    let segments = n.div_ceil(RESIDUAL_SEGMENT) + 1;
    let signs: Vec<f32> = (0..segments)
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    (0..n)
        .map(|i| {
            let s = i / RESIDUAL_SEGMENT;
            let p = i % RESIDUAL_SEGMENT;
            let next = RESIDUAL_SEGMENT - p;
            if next <= RESIDUAL_RAMP {
                // Blend into the next segment over the ramp.
                let a = (RESIDUAL_RAMP - next) as f32 / RESIDUAL_RAMP as f32;
                let w = 0.5 - 0.5 * (std::f32::consts::PI * a).cos();
                signs[s] * (1.0 - w) + signs[s + 1] * w
            } else {
                signs[s]
            }
        })
        .collect()
}

/// Face motion for one subject given `[n, 64]` features.
pub fn face_from_features(
    features: &[f32],
    n: usize,
    vertices: usize,
    style: &SubjectStyle,
    corpus_seed: u64,
    subject_index: usize,
    noise: f32,
    rng: &mut impl Rng,
) -> Vec<f32> {
    let c = vertices * 3;
    let w = readout(c, corpus_seed);
    let smooth = smooth_frames(features, n, FEATURE_DIM, style.smoothing);
    let mut style_rng = stream_rng(corpus_seed ^ 0x0ff5e7, subject_index as u64);
    let offset = direction(c, &mut style_rng);
    let residual_dir = direction(c, &mut style_rng);
    let signs = segment_signs(n, rng);
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let f = &smooth[i * FEATURE_DIM..(i + 1) * FEATURE_DIM];
        for ch in 0..c {
            let row = &w[ch * FEATURE_DIM..(ch + 1) * FEATURE_DIM];
            let lin: f32 = row.iter().zip(f).map(|(a, b)| a * b).sum();
            let res = noise * signs[i] * residual_dir[ch];
            out[i * c + ch] = style.amplitude * (lin + res) + style.offset * offset[ch];
        }
    }
    out
}

/// Overall gain of toy head rotations, bringing them near unit scale.
const HEAD_SCALE: f32 = 4.0;

/// Head axis-angle motion: energy-driven pitch nods plus stochastic drift.
pub fn head_from_features(
    features: &[f32],
    n: usize,
    fps: f32,
    style: &SubjectStyle,
    noise: f32,
    rng: &mut impl Rng,
) -> Vec<f32> {
    let smooth = smooth_frames(features, n, FEATURE_DIM, 5);
    let energy: Vec<f32> = (0..n)
        .map(|i| {
            let f = &smooth[i * FEATURE_DIM..(i + 1) * FEATURE_DIM];
            f.iter().map(|v| v * v).sum::<f32>() / FEATURE_DIM as f32
        })
        .collect();
    let energy = smooth_frames(&energy, n, 1, 7);
    let mean = energy.iter().sum::<f32>() / n as f32;
    let tau = std::f32::consts::TAU;
    let drift_freq = rng.random_range(0.05..0.2f32);
    let drift_phase = rng.random_range(0.0..tau);
    let yaw_signs = segment_signs(n, rng);
    let mut out = vec![0.0; n * 3];
    for i in 0..n {
        let t = i as f32 / fps;
        let drift = (tau * drift_freq * t + drift_phase).sin();
        let pitch = 1.2 * (energy[i] - mean);
        let amp = HEAD_SCALE * style.amplitude;
        out[i * 3] = amp * (pitch + 0.3 * noise * drift);
        out[i * 3 + 1] = amp * (0.4 * noise * yaw_signs[i] + 0.2 * (energy[i] - mean));
        out[i * 3 + 2] = amp * 0.3 * noise * drift;
    }
    out
}

pub fn gen_toy_corpus(spec: &ToyCorpusSpec) -> Result<ToyCorpus, ToyError> {
    if spec.subjects.is_empty() {
        return Err(ToyError::Spec("no subjects".into()));
    }
    if spec.frames < 2 || spec.vertices == 0 {
        return Err(ToyError::Spec("need at least 2 frames and 1 vertex".into()));
    }
    if !(spec.fps > 0.0) || !(spec.noise >= 0.0) {
        return Err(ToyError::Spec(
            "fps must be positive and noise non-negative".into(),
        ));
    }
    let mut items = Vec::new();
    for (si, style) in spec.subjects.iter().enumerate() {
        for q in 0..spec.sequences_per_subject {
            items.push(gen_item(spec, si, style, q as u64));
        }
    }
    Ok(ToyCorpus {
        spec: spec.clone(),
        items,
    })
}

fn gen_item(spec: &ToyCorpusSpec, si: usize, style: &SubjectStyle, q: u64) -> CorpusItem {
    let n = spec.frames;
    let stream = ((si as u64) << 32) | q;
    let mut rng = stream_rng(spec.seed, stream);
    let feats = synth_features(n, spec.fps, &mut rng);
    let face = face_from_features(
        &feats,
        n,
        spec.vertices,
        style,
        spec.seed,
        si,
        spec.noise,
        &mut rng,
    );
    let head = head_from_features(&feats, n, spec.fps, style, spec.noise, &mut rng);
    let c = spec.vertices * 3;
    CorpusItem {
        subject: si,
        features: FeatureTrack {
            fps: spec.fps,
            source: format!("{}-{q}", style.name),
            data: Tensor::from_parts(vec![n, FEATURE_DIM], feats),
        },
        face: MotionSequence::new(
            MotionKind::Face,
            spec.fps,
            style.name.clone(),
            Tensor::from_parts(vec![n, c], face),
        )
        .expect("valid face shape"),
        head: MotionSequence::new(
            MotionKind::Head,
            spec.fps,
            style.name.clone(),
            Tensor::from_parts(vec![n, 3], head),
        )
        .expect("valid head shape"),
    }
}

/// Channels standing in for the mouth region: the first quarter of vertices.
pub fn lip_region(vertices: usize) -> Vec<usize> {
    (0..(vertices / 4).max(1) * 3).collect()
}
