//! Variance schedule, forward corruption, guided samplers and training.

pub mod sampler;
pub mod schedule;
pub mod train;

pub use sampler::{
    ddim_sample, ddim_sample_from, ddim_timesteps, ddpm_sample, ddpm_step, generate_ensemble, guided_eps, predict_x0,
    SamplerConfig,
};
pub use schedule::{make_schedule, q_sample, NoiseSchedule, ScheduleConfig};
pub use train::{heldout_loss, log_csv, train, train_with, LogRow, TrainConfig, TrainOutcome};
