//! Random guidance masks for head training.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskFamily {
    /// Clean prefix and suffix covering 5-50% of the window in total.
    Inbetween,
    /// Isolated clean frames at 1-3 per second.
    Keyframe,
    /// Even split between the two.
    Mixed,
    /// No guidance; plain diffusion training.
    Zeros,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceMaskSampler {
    pub family: MaskFamily,
    pub fps: f32,
}

impl GuidanceMaskSampler {
    pub fn new(family: MaskFamily, fps: f32) -> Self {
        Self { family, fps }
    }

    /// Draws a 0/1 mask over `n` frames. At least one frame stays 0.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<f32> {
        let family = match self.family {
            MaskFamily::Mixed if rng.random_bool(0.5) => MaskFamily::Inbetween,
            MaskFamily::Mixed => MaskFamily::Keyframe,
            f => f,
        };
        let mut m = vec![0.0; n];
        match family {
            MaskFamily::Zeros | MaskFamily::Mixed => {}
            MaskFamily::Inbetween => {
                let total = rng.random_range(0.05..=0.5f64);
                let split = rng.random_range(0.0..=1.0f64);
                let head = (total * split * n as f64).round() as usize;
                let tail = (total * (1.0 - split) * n as f64).round() as usize;
                m[..head.min(n)].fill(1.0);
                m[n - tail.min(n)..].fill(1.0);
            }
            MaskFamily::Keyframe => {
                let rate = rng.random_range(1.0..=3.0f64);
                let p = (rate / self.fps as f64).min(1.0);
                for v in &mut m {
                    if rng.random_bool(p) {
                        *v = 1.0;
                    }
                }
            }
        }
        if m.iter().all(|&v| v == 1.0) {
            let k = index::sample(rng, n, 1).index(0);
            m[k] = 0.0;
        }
        m
    }
}
