//! Request and response bodies of the HTTP interface.
//!
//! Frames travel as nested arrays, one inner array per frame.

use serde::{Deserialize, Serialize};

use crate::metrics::MetricReport;
use crate::sampling::{BoundaryReport, ImputationMode};

pub type Frames = Vec<Vec<f32>>;

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesizeRequest {
    pub model: String,
    pub length: usize,
    #[serde(default)]
    pub seed: u64,
    /// Guidance scale; 0.5 when absent.
    #[serde(default)]
    pub scale: Option<f64>,
    #[serde(default = "one")]
    pub count: usize,
    /// Subject style for facial models; the mean style when absent.
    #[serde(default)]
    pub subject: Option<String>,
    /// Id of a stored feature track used as the audio condition.
    #[serde(default)]
    pub features: Option<String>,
    /// Inline `[N, audio_in]` audio condition.
    #[serde(default)]
    pub audio: Option<Frames>,
    /// Return a job id at once and run in the background.
    #[serde(default, rename = "async")]
    pub background: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Keyframe {
    pub frame: usize,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub model: String,
    /// Stored base sequence.
    #[serde(default)]
    pub sequence: Option<String>,
    /// Inline base sequence.
    #[serde(default)]
    pub frames: Option<Frames>,
    /// Length of an empty base when only keyframes are given.
    #[serde(default)]
    pub length: Option<usize>,
    /// Per-frame 0/1 mask over the base; keyframes are added on top.
    #[serde(default)]
    pub mask: Option<Vec<f32>>,
    #[serde(default)]
    pub keyframes: Vec<Keyframe>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scale: Option<f64>,
    #[serde(default)]
    pub subject: Option<String>,
    #[serde(default)]
    pub features: Option<String>,
    #[serde(default)]
    pub audio: Option<Frames>,
    /// Facial only: copy known frames into the result.
    #[serde(default = "yes")]
    pub final_replacement: bool,
    /// Head only.
    #[serde(default)]
    pub mode: ImputationMode,
    #[serde(default, rename = "async")]
    pub background: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRequest {
    pub pred: Frames,
    pub gt: Frames,
    /// Channels compared by the lip-sync metric; all channels when absent.
    #[serde(default)]
    pub region: Option<Vec<usize>>,
    /// `face` or `head`; three-channel input defaults to head.
    #[serde(default)]
    pub kind: Option<String>,
    #[serde(default)]
    pub fps: Option<f32>,
    #[serde(default)]
    pub sigma: Option<f64>,
    /// Sample set for the diversity metric.
    #[serde(default)]
    pub samples: Option<Vec<Frames>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub name: String,
    pub variant: String,
    pub motion_channels: usize,
    pub audio_in: usize,
    pub subjects: Vec<String>,
    pub parameters: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceInfo {
    pub id: String,
    pub kind: String,
    pub frames: usize,
    pub channels: usize,
    pub fps: f32,
    pub subject: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequencePayload {
    pub index: usize,
    pub kind: String,
    pub fps: f32,
    pub frames: Frames,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizeResult {
    pub model: String,
    pub sequences: Vec<SequencePayload>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditResult {
    pub model: String,
    pub fps: f32,
    pub frames: Frames,
    pub known_frames: Vec<usize>,
    pub boundary: BoundaryReport,
}

/// Every response: the parsed request, wall time, and the payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub request: serde_json::Value,
    pub elapsed_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<String>,
    #[serde(flatten)]
    pub result: T,
}

pub type MetricsResponse = Envelope<MetricReport>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<String>,
}
