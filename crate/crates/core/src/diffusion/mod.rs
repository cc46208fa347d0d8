//! Noise schedules, the denoising network, exact coupled inversion and
//! denoiser training.

mod denoiser;
mod edict;
mod schedule;
mod train;

pub use denoiser::{Denoiser, DenoiserCache, DenoiserConfig, NoisePredictor, ZeroPredictor};
pub use edict::{
    edict_denoise_step, edict_noise_step, forward_perturb, ddim_step, transform_d,
    transform_d_backward, transform_d_taped, transform_h, transform_h_backward, transform_h_taped,
    unmixed_coupled_step, CoupledState, DecodeTape, EncodeTape, MixingParams,
};
pub use schedule::{NoiseSchedule, ScheduleConfig};
pub use train::{train_denoiser, validation_loss, LossWeighting, TrainConfig, TrainReport};
