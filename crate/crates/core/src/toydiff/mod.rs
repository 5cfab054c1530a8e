//! Toy latent diffusion with real self-attention blocks.

mod generator;
pub mod resample;
pub mod schedule;

pub use generator::{
    ddim_step, direct_replace, extract_queries, generator_forward, guidance_update, inject_kv, query_loss_gradient,
    Control, DenoiseTrace, GeneratorConfig, GeneratorWeights, KvInjection, KvSnapshot, StageTrace, StageWeights,
};
pub use resample::Resampler;
pub use schedule::{make_schedule, DiffusionSchedule};
