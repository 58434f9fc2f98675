//! Binary sequence and feature containers.
//!
//! Both share one envelope: 8-byte magic, `u32` version, `u8` kind, `u32`
//! frames, `u32` channels, `f32` fps, length-prefixed UTF-8 subject, row-major
//! little-endian `f32` payload and a trailing CRC32 of everything before it.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::motion::{MotionError, MotionKind, MotionSequence};
use crate::tensor::Tensor;

pub const SEQUENCE_MAGIC: &[u8; 8] = b"3DIFMSEQ";
pub const FEATURE_MAGIC: &[u8; 8] = b"3DIFFEAT";
pub const FORMAT_VERSION: u32 = 1;
pub const RAW_FEATURE_CHANNELS: usize = 768;
const FEATURE_KIND: u8 = 2;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("unknown kind tag {0}")]
    Kind(u8),
    #[error("file truncated: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("header declares {frames}x{channels} values but payload holds {payload_bytes} bytes")]
    PayloadSize {
        frames: usize,
        channels: usize,
        payload_bytes: usize,
    },
    #[error("subject id is not valid UTF-8")]
    Utf8,
    #[error("feature file has {got} channels, expected {expected}")]
    Channels { expected: usize, got: usize },
    #[error("file holds no frames")]
    Empty,
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Default)]
pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    pub fn f32s(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.f32(*v);
        }
    }
    /// Appends the CRC32 trailer and returns the finished buffer.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    /// Verifies the CRC32 trailer and returns a reader over the body.
    pub fn checked(file: &'a [u8]) -> Result<Self, FormatError> {
        if file.len() < 4 {
            return Err(FormatError::Truncated {
                offset: 0,
                needed: 4,
                available: file.len(),
            });
        }
        let (body, tail) = file.split_at(file.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        let reader = Self { buf: body, pos: 0 };
        if stored != computed {
            // A wrong magic is the more useful diagnostic when both fail.
            if body.len() >= 8 && !body.starts_with(b"3DIF") {
                return Err(FormatError::BadMagic(body[..8].to_vec()));
            }
            return Err(FormatError::Checksum { stored, computed });
        }
        Ok(reader)
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.buf.len() - self.pos,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn str(&mut self) -> Result<String, FormatError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| FormatError::Utf8)
    }
    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

struct Envelope {
    kind: u8,
    fps: f32,
    subject: String,
    frames: usize,
    channels: usize,
    payload: Vec<f32>,
}

fn encode(magic: &[u8; 8], env: &Envelope) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.bytes(magic);
    w.u32(FORMAT_VERSION);
    w.u8(env.kind);
    w.u32(env.frames as u32);
    w.u32(env.channels as u32);
    w.f32(env.fps);
    w.str(&env.subject);
    w.f32s(&env.payload);
    w.finish()
}

fn decode(magic: &[u8; 8], bytes: &[u8]) -> Result<Envelope, FormatError> {
    if bytes.len() >= 8 && &bytes[..8] != magic {
        return Err(FormatError::BadMagic(bytes[..8].to_vec()));
    }
    let mut r = ByteReader::checked(bytes)?;
    let m = r.take(8)?;
    if m != magic {
        return Err(FormatError::BadMagic(m.to_vec()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::Version(version));
    }
    let kind = r.u8()?;
    let frames = r.u32()? as usize;
    let channels = r.u32()? as usize;
    let fps = r.f32()?;
    let subject = r.str()?;
    let payload_bytes = r.remaining();
    if frames.checked_mul(channels).and_then(|v| v.checked_mul(4)) != Some(payload_bytes) {
        return Err(FormatError::PayloadSize {
            frames,
            channels,
            payload_bytes,
        });
    }
    let payload = r.f32s(frames * channels)?;
    Ok(Envelope {
        kind,
        fps,
        subject,
        frames,
        channels,
        payload,
    })
}

pub fn encode_sequence(seq: &MotionSequence) -> Vec<u8> {
    encode(
        SEQUENCE_MAGIC,
        &Envelope {
            kind: seq.kind.tag(),
            fps: seq.fps,
            subject: seq.subject.clone(),
            frames: seq.frames(),
            channels: seq.channels(),
            payload: seq.data().data().to_vec(),
        },
    )
}

pub fn decode_sequence(bytes: &[u8]) -> Result<MotionSequence, FormatError> {
    let env = decode(SEQUENCE_MAGIC, bytes)?;
    let kind = MotionKind::from_tag(env.kind).ok_or(FormatError::Kind(env.kind))?;
    if env.frames == 0 || env.channels == 0 {
        return Err(FormatError::Empty);
    }
    let data =
        Tensor::new(vec![env.frames, env.channels], env.payload).map_err(MotionError::from)?;
    Ok(MotionSequence::new(kind, env.fps, env.subject, data)?)
}

pub fn write_sequence(path: impl AsRef<Path>, seq: &MotionSequence) -> Result<(), FormatError> {
    Ok(fs::write(path, encode_sequence(seq))?)
}

pub fn read_sequence(path: impl AsRef<Path>) -> Result<MotionSequence, FormatError> {
    decode_sequence(&fs::read(path)?)
}

/// Per-frame feature track with its native frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrack {
    pub fps: f32,
    pub source: String,
    /// `[N, C]`.
    pub data: Tensor,
}

pub fn encode_features(track: &FeatureTrack) -> Vec<u8> {
    encode(
        FEATURE_MAGIC,
        &Envelope {
            kind: FEATURE_KIND,
            fps: track.fps,
            subject: track.source.clone(),
            frames: track.data.dim(0),
            channels: track.data.dim(1),
            payload: track.data.data().to_vec(),
        },
    )
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureTrack, FormatError> {
    if bytes.is_empty() {
        return Err(FormatError::Empty);
    }
    let env = decode(FEATURE_MAGIC, bytes)?;
    if env.kind != FEATURE_KIND {
        return Err(FormatError::Kind(env.kind));
    }
    if env.frames == 0 || env.channels == 0 {
        return Err(FormatError::Empty);
    }
    if !(env.fps > 0.0 && env.fps.is_finite()) {
        return Err(MotionError::InvalidFps(env.fps).into());
    }
    Ok(FeatureTrack {
        fps: env.fps,
        source: env.subject,
        data: Tensor::from_parts(vec![env.frames, env.channels], env.payload),
    })
}

pub fn write_features(path: impl AsRef<Path>, track: &FeatureTrack) -> Result<(), FormatError> {
    Ok(fs::write(path, encode_features(track))?)
}

/// Reads a feature file of any width.
pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureTrack, FormatError> {
    decode_features(&fs::read(path)?)
}

/// Reads raw speech-encoder features; the file must hold 768 channels.
pub fn import_features(path: impl AsRef<Path>) -> Result<FeatureTrack, FormatError> {
    let track = read_features(path)?;
    let got = track.data.dim(1);
    if got != RAW_FEATURE_CHANNELS {
        return Err(FormatError::Channels {
            expected: RAW_FEATURE_CHANNELS,
            got,
        });
    }
    Ok(track)
}

/// One frame per line, values separated by spaces.
pub fn export_text(seq: &MotionSequence, mut out: impl Write) -> std::io::Result<()> {
    for n in 0..seq.frames() {
        let line: Vec<String> = seq.frame(n).iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}
