//! Denoising diffusion: forward process, noise-prediction loss, biased
//! timestep sampling, ancestral sampling and weight averaging.

mod ema;
mod mixture;
mod model;
mod sample;
mod schedule;

pub use ema::EmaTracker;
pub use mixture::{MixtureComponent, TimestepMixture};
pub use model::{diffusion_loss, DenoiserArch, DenoiserModel};
pub use sample::{ancestral_sample, sample_dataset, single_draw_loss, Conditioned, NoisePredictor};
pub use schedule::{forward_noise, noise_with_alpha_bar, NoiseSchedule};
