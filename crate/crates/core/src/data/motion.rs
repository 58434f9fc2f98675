use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{ShapeError, Tensor};

pub const DEFAULT_FPS: f32 = 30.0;
pub const HEAD_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    /// Per-vertex 3D displacements, `C = D * 3`.
    Face,
    /// Axis-angle head rotation, `C = 3`.
    Head,
}

impl MotionKind {
    pub fn tag(self) -> u8 {
        match self {
            MotionKind::Face => 0,
            MotionKind::Head => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(MotionKind::Face),
            1 => Some(MotionKind::Head),
            _ => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MotionError {
    #[error("fps must be positive and finite, got {0}")]
    InvalidFps(f32),
    #[error("head sequences have 3 channels, got {0}")]
    HeadChannels(usize),
    #[error("face sequences need a multiple of 3 channels, got {0}")]
    FaceChannels(usize),
    #[error("motion data must be [frames, channels], got {0:?}")]
    Rank(Vec<usize>),
    #[error("{what}: {left} vs {right}")]
    Mismatch {
        what: &'static str,
        left: String,
        right: String,
    },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// An `N x C` trajectory, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub kind: MotionKind,
    pub fps: f32,
    pub subject: String,
    data: Tensor,
}

impl MotionSequence {
    pub fn new(
        kind: MotionKind,
        fps: f32,
        subject: impl Into<String>,
        data: Tensor,
    ) -> Result<Self, MotionError> {
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(MotionError::InvalidFps(fps));
        }
        let [_, c] = data.shape()[..] else {
            return Err(MotionError::Rank(data.shape().to_vec()));
        };
        match kind {
            MotionKind::Head if c != HEAD_CHANNELS => return Err(MotionError::HeadChannels(c)),
            MotionKind::Face if c % 3 != 0 => return Err(MotionError::FaceChannels(c)),
            _ => {}
        }
        Ok(Self {
            kind,
            fps,
            subject: subject.into(),
            data,
        })
    }

    pub fn from_frames(
        kind: MotionKind,
        fps: f32,
        subject: impl Into<String>,
        frames: &[Vec<f32>],
    ) -> Result<Self, MotionError> {
        let n = frames.len();
        let c = frames.first().map_or(0, |f| f.len());
        if let Some(bad) = frames.iter().find(|f| f.len() != c) {
            return Err(MotionError::Mismatch {
                what: "ragged frames",
                left: c.to_string(),
                right: bad.len().to_string(),
            });
        }
        let data = Tensor::new(vec![n, c], frames.concat())?;
        Self::new(kind, fps, subject, data)
    }

    pub fn frames(&self) -> usize {
        self.data.dim(0)
    }

    pub fn channels(&self) -> usize {
        self.data.dim(1)
    }

    pub fn duration_secs(&self) -> f32 {
        self.frames() as f32 / self.fps
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn frame(&self, n: usize) -> &[f32] {
        let c = self.channels();
        &self.data.data()[n * c..(n + 1) * c]
    }

    pub fn to_frames(&self) -> Vec<Vec<f32>> {
        (0..self.frames()).map(|n| self.frame(n).to_vec()).collect()
    }

    /// Copy of frames `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Self {
        let c = self.channels();
        let data = self.data.data()[start * c..(start + len) * c].to_vec();
        Self {
            kind: self.kind,
            fps: self.fps,
            subject: self.subject.clone(),
            data: Tensor::from_parts(vec![len, c], data),
        }
    }

    pub fn with_data(&self, data: Tensor) -> Result<Self, MotionError> {
        Self::new(self.kind, self.fps, self.subject.clone(), data)
    }
}

/// Face and head tracks of one performance.
#[derive(Debug, Clone, PartialEq)]
pub struct HolisticAnimation {
    pub fps: f32,
    pub subject: String,
    pub face_channels: usize,
    /// `[N, face_channels + 3]`.
    pub data: Tensor,
}

pub fn compose_holistic(
    face: &MotionSequence,
    head: &MotionSequence,
) -> Result<HolisticAnimation, MotionError> {
    if face.kind != MotionKind::Face || head.kind != MotionKind::Head {
        return Err(MotionError::Mismatch {
            what: "expected face and head tracks",
            left: format!("{:?}", face.kind),
            right: format!("{:?}", head.kind),
        });
    }
    if face.frames() != head.frames() {
        return Err(MotionError::Mismatch {
            what: "frame counts differ",
            left: face.frames().to_string(),
            right: head.frames().to_string(),
        });
    }
    if face.fps != head.fps {
        return Err(MotionError::Mismatch {
            what: "fps differs",
            left: face.fps.to_string(),
            right: head.fps.to_string(),
        });
    }
    let (fc, n) = (face.channels(), face.frames());
    let mut data = Vec::with_capacity(n * (fc + HEAD_CHANNELS));
    for i in 0..n {
        data.extend_from_slice(face.frame(i));
        data.extend_from_slice(head.frame(i));
    }
    Ok(HolisticAnimation {
        fps: face.fps,
        subject: face.subject.clone(),
        face_channels: fc,
        data: Tensor::from_parts(vec![n, fc + HEAD_CHANNELS], data),
    })
}

impl HolisticAnimation {
    pub fn split(&self) -> (MotionSequence, MotionSequence) {
        let n = self.data.dim(0);
        let width = self.face_channels + HEAD_CHANNELS;
        let mut face = Vec::with_capacity(n * self.face_channels);
        let mut head = Vec::with_capacity(n * HEAD_CHANNELS);
        for row in self.data.data().chunks(width) {
            face.extend_from_slice(&row[..self.face_channels]);
            head.extend_from_slice(&row[self.face_channels..]);
        }
        let mk = |kind, c, d| MotionSequence {
            kind,
            fps: self.fps,
            subject: self.subject.clone(),
            data: Tensor::from_parts(vec![n, c], d),
        };
        (
            mk(MotionKind::Face, self.face_channels, face),
            mk(MotionKind::Head, HEAD_CHANNELS, head),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(kind: MotionKind, n: usize, c: usize, fps: f32) -> MotionSequence {
        let data = Tensor::from_fn(&[n, c], |i| i as f32 * 0.5 - 3.0);
        MotionSequence::new(kind, fps, "s0", data).unwrap()
    }

    #[test]
    fn validates_kind_channels() {
        assert!(matches!(
            MotionSequence::new(MotionKind::Head, 30.0, "a", Tensor::zeros(&[4, 4])),
            Err(MotionError::HeadChannels(4))
        ));
        assert!(matches!(
            MotionSequence::new(MotionKind::Face, 30.0, "a", Tensor::zeros(&[4, 5])),
            Err(MotionError::FaceChannels(5))
        ));
        assert!(matches!(
            MotionSequence::new(MotionKind::Face, 0.0, "a", Tensor::zeros(&[4, 6])),
            Err(MotionError::InvalidFps(_))
        ));
    }

    #[test]
    fn holistic_round_trip() {
        let face = seq(MotionKind::Face, 12, 6, 25.0);
        let head = seq(MotionKind::Head, 12, 3, 25.0);
        let h = compose_holistic(&face, &head).unwrap();
        assert_eq!(h.fps, 25.0);
        let (f2, h2) = h.split();
        assert_eq!(f2, face);
        assert_eq!(h2, head);
    }

    #[test]
    fn holistic_rejects_mismatch() {
        let face = seq(MotionKind::Face, 12, 6, 30.0);
        let head = seq(MotionKind::Head, 11, 3, 30.0);
        assert!(compose_holistic(&face, &head).is_err());
        let head = seq(MotionKind::Head, 12, 3, 25.0);
        assert!(compose_holistic(&face, &head).is_err());
    }

    #[test]
    fn frames_round_trip() {
        let s = seq(MotionKind::Head, 5, 3, 30.0);
        let back =
            MotionSequence::from_frames(MotionKind::Head, 30.0, "s0", &s.to_frames()).unwrap();
        assert_eq!(back, s);
        assert_eq!(s.window(1, 2).frame(0), s.frame(1));
    }
}
