use serde::{Deserialize, Serialize};

use crate::data::motion::HEAD_CHANNELS;
use crate::data::toy::{DEFAULT_VERTICES, FEATURE_DIM};
use crate::diffusion::DiffusionSpec;

pub const AUDIO_DIM: usize = FEATURE_DIM;
pub const STYLE_DIM: usize = 16;
pub const TIME_DIM: usize = 16;
pub const MIN_FRAMES: usize = 8;
pub const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Facial,
    Head,
}

impl Variant {
    pub fn tag(self) -> u8 {
        match self {
            Variant::Facial => 0,
            Variant::Head => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Variant::Facial),
            1 => Some(Variant::Head),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Facial => "facial",
            Variant::Head => "head",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "facial" | "face" => Ok(Variant::Facial),
            "head" => Ok(Variant::Head),
            other => Err(format!(
                "unknown variant `{other}` (expected facial or head)"
            )),
        }
    }
}

/// Architecture descriptor stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub variant: Variant,
    /// Motion channels predicted by the network.
    pub motion_channels: usize,
    /// Feature widths of the three resolution levels.
    pub widths: [usize; 3],
    pub groups: usize,
    /// Width of the incoming audio features. Anything other than 64 adds a
    /// learned per-frame projection to 64 channels.
    pub audio_in: usize,
    /// Style embeddings, one per known subject (facial only).
    pub subjects: Vec<String>,
    pub skip_connections: bool,
    /// Noise schedule the weights were trained for.
    #[serde(default)]
    pub diffusion: DiffusionSpec,
}

impl ArchConfig {
    pub fn facial(vertices: usize, subjects: Vec<String>) -> Self {
        Self {
            variant: Variant::Facial,
            motion_channels: vertices * 3,
            widths: [64, 128, 256],
            groups: 8,
            audio_in: AUDIO_DIM,
            subjects,
            skip_connections: false,
            diffusion: DiffusionSpec::default(),
        }
    }

    pub fn head() -> Self {
        Self {
            variant: Variant::Head,
            motion_channels: HEAD_CHANNELS,
            widths: [64, 128, 256],
            groups: 8,
            audio_in: AUDIO_DIM,
            subjects: Vec::new(),
            skip_connections: true,
            diffusion: DiffusionSpec::default(),
        }
    }

    pub fn with_widths(mut self, widths: [usize; 3]) -> Self {
        self.widths = widths;
        self
    }

    /// Network input channels: motion plus the guidance flag for the head.
    pub fn input_channels(&self) -> usize {
        match self.variant {
            Variant::Facial => self.motion_channels,
            Variant::Head => self.motion_channels + 1,
        }
    }

    pub fn style_dim(&self) -> usize {
        match self.variant {
            Variant::Facial => STYLE_DIM,
            Variant::Head => 0,
        }
    }

    /// Channels appended at every level: audio, style and time embedding.
    pub fn cond_channels(&self) -> usize {
        AUDIO_DIM + self.style_dim() + TIME_DIM
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.groups == 0
            || self
                .widths
                .iter()
                .any(|&w| w % self.groups != 0 || w / self.groups < 2)
        {
            return Err(format!(
                "widths {:?} must split into {} groups of at least 2 channels",
                self.widths, self.groups
            ));
        }
        match self.variant {
            Variant::Head if self.motion_channels != HEAD_CHANNELS => {
                return Err("head variant predicts 3 channels".into())
            }
            Variant::Head if !self.skip_connections => {
                return Err("head variant requires skip connections".into())
            }
            Variant::Facial if self.motion_channels == 0 || self.motion_channels % 3 != 0 => {
                return Err("facial channels must be a positive multiple of 3".into())
            }
            Variant::Facial if self.subjects.is_empty() => {
                return Err("facial variant needs at least one subject".into())
            }
            _ => {}
        }
        if self.audio_in == 0 {
            return Err("audio input width must be positive".into());
        }
        Ok(())
    }

    /// Frames on either side of an output frame that can influence it.
    pub fn receptive_half_width(&self) -> usize {
        // Encoder reach in input frames: 1, 2, 4 after each conv. Each
        // upsampling step adds one coarse frame and each decoder conv one
        // frame at its own resolution.
        let e2 = 4;
        let d1 = e2 + 2 + 2;
        d1 + 1 + 1
    }
}

impl Default for ArchConfig {
    fn default() -> Self {
        let subjects = vec!["s0".to_string(), "s1".to_string(), "s2".to_string()];
        Self::facial(DEFAULT_VERTICES, subjects)
    }
}
