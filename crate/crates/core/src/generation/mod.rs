//! Inference: masking schedules, guidance, noise augmentation, decoding.

pub mod decode;
pub mod guidance;
pub mod schedule;

pub use decode::{
    generate_frame, generate_group, generate_groups, rollout, rollout_batch, rollout_tokens, slot_stream, DecodeOptions, GroupJob, RolloutConfig,
    RolloutOutput,
};
pub use guidance::{augment, cfg_velocity, AugmentConfig, AugmentMode, GuidanceScales, SamplingPreset};
pub use schedule::{cosine_masked_counts, cosine_set_sizes, sample_permutation, MaskPlan};
