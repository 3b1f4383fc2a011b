//! Toy dual-branch diffusion: schedule, denoiser, training and sampling.

pub mod model;
pub mod sampler;
pub mod schedule;
pub mod synth;
pub mod train;

pub use model::{Branch, Geometry, Site, ToyConfig, ToyDenoiser};
pub use sampler::{ddim_sample, RotationPolicy, SampleOutput, SamplerConfig};
pub use schedule::{add_noise, make_schedule, NoiseSchedule};
pub use synth::{synth_panorama, SynthParams, TrainSample};
pub use train::{train_toy, NoiseInit, TrainConfig, Trainer};
