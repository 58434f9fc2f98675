//! Audio-conditioned motion diffusion: synthesis, keyframe editing and
//! evaluation for face-displacement and head-rotation sequences.

pub mod autograd;
pub mod cli;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod sampling;
pub mod service;
pub mod tensor;
pub mod training;

pub use tensor::{Real, Tensor};
