//! Losses, window-cropped training loops and subject fine-tuning.

pub mod loss;
pub mod masks;
pub mod trainer;

#[cfg(test)]
mod tests;

pub use loss::{loss_mask, loss_simple, loss_velocity, LossError};
pub use masks::{GuidanceMaskSampler, MaskFamily};
pub use trainer::{
    denoising_error, facial_clips, finetune_personalize, head_clips, mix_guidance, train_facial,
    train_head_sgdiff, Clip, LossHistory, LossRecord, TrainConfig, TrainError, TrainOutcome,
    Trainer,
};
