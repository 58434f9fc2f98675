//! Fully convolutional x0-predicting denoisers for face and head motion.
//!
//! Both variants share a three-level temporal U-shaped network. Audio
//! features, the subject style (facial only) and a diffusion-step embedding
//! are concatenated onto the input of every level. The head variant reads an
//! extra guidance-flag channel and adds encoder-decoder skip connections.

pub mod arch;
pub mod audio;
pub mod checkpoint;
pub mod model;

#[cfg(test)]
mod tests;

pub use arch::{ArchConfig, Variant};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use model::{ConditionSet, DenoiserError, DenoiserModel, Style};
