//! Noise schedules, the forward/reverse Gaussian process, the conditional
//! sampler and EMA parameter tracking.

mod ema;
mod process;
mod sampler;
mod schedule;

pub use ema::ema_update;
pub use process::{forward_marginal, forward_step, predict_x0, reverse_mean, reverse_step};
pub use sampler::{sample, sample_with, SamplerConfig, VarianceMode};
pub use schedule::{linear_beta_schedule, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
