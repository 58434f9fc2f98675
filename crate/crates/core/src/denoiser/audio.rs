//! Feature-rate conversion and the per-frame audio projection.

use rand::Rng;
use thiserror::Error;

use super::arch::AUDIO_DIM;
use crate::autograd::kernels::{linear_forward, ResampleTable};
use crate::data::io::RAW_FEATURE_CHANNELS;
use crate::params::kaiming;
use crate::tensor::{ShapeError, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AudioError {
    #[error("audio features need at least 2 frames, got {0}")]
    TooShort(usize),
    #[error("frame rates must be positive, got {src} -> {dst}")]
    Fps { src: f32, dst: f32 },
    #[error("features are not [frames, channels]: {0:?}")]
    Rank(Vec<usize>),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Number of frames after resampling `n_raw` frames from `src_fps` to `dst_fps`.
pub fn resampled_len(n_raw: usize, src_fps: f32, dst_fps: f32) -> usize {
    ((n_raw as f64 * dst_fps as f64 / src_fps as f64).round() as usize).max(1)
}

/// Linear interpolation of `[N_raw, C]` features onto the motion frame grid,
/// with the first and last frames mapped onto each other.
pub fn resample_features(raw: &Tensor, src_fps: f32, dst_fps: f32) -> Result<Tensor, AudioError> {
    let [n_raw, c] = raw.shape()[..] else {
        return Err(AudioError::Rank(raw.shape().to_vec()));
    };
    if n_raw < 2 {
        return Err(AudioError::TooShort(n_raw));
    }
    if !(src_fps > 0.0 && dst_fps > 0.0) {
        return Err(AudioError::Fps {
            src: src_fps,
            dst: dst_fps,
        });
    }
    let n = resampled_len(n_raw, src_fps, dst_fps);
    if n == n_raw {
        return Ok(raw.clone());
    }
    let table = ResampleTable::align_corners(n_raw, n);
    // The table works on the last axis, so resample channel rows.
    let by_channel = table.apply(c, raw.transpose2().data());
    Ok(Tensor::new(vec![c, n], by_channel)?.transpose2())
}

/// Affine map from raw encoder features to the 64 conditioning channels.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioProjection {
    /// `[64, C_raw]`.
    pub weight: Tensor,
    /// `[64]`.
    pub bias: Tensor,
}

impl AudioProjection {
    pub fn init(input: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: kaiming(&[AUDIO_DIM, input], input, rng),
            bias: Tensor::zeros(&[AUDIO_DIM]),
        }
    }

    pub fn raw_default(rng: &mut impl Rng) -> Self {
        Self::init(RAW_FEATURE_CHANNELS, rng)
    }

    pub fn apply(&self, feats: &Tensor) -> Result<Tensor, AudioError> {
        let [m, f_in] = feats.shape()[..] else {
            return Err(AudioError::Rank(feats.shape().to_vec()));
        };
        if f_in != self.weight.dim(1) {
            return Err(ShapeError::Mismatch(format!(
                "projection expects {} channels, got {f_in}",
                self.weight.dim(1)
            ))
            .into());
        }
        let out = linear_forward(
            m,
            f_in,
            AUDIO_DIM,
            feats.data(),
            self.weight.data(),
            Some(self.bias.data()),
        );
        Ok(Tensor::new(vec![m, AUDIO_DIM], out)?)
    }
}

/// Resamples raw features to the motion rate, then projects to 64 channels.
pub fn project_audio(
    raw: &Tensor,
    src_fps: f32,
    dst_fps: f32,
    proj: &AudioProjection,
) -> Result<Tensor, AudioError> {
    proj.apply(&resample_features(raw, src_fps, dst_fps)?)
}
