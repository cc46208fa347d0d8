//! Diffusion-latent MAP image enhancement with pluggable no-reference
//! quality priors, and the pairwise model-comparison pipeline built on it.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`], [`resample`], [`synth`]: pixel grids, bicubic resampling and
//!   procedurally generated toy data.
//! * [`nn`]: a small convolutional toolkit with hand-written backward passes.
//! * [`diffusion`]: noise schedules, the denoiser, exact coupled (EDICT)
//!   inversion and denoiser training.
//! * [`quality`]: differentiable quality scorers, logistic calibration and
//!   the multi-scale pairwise-ranked quality model.
//! * [`solver`]: the latent-space MAP solver and pixel-space baselines.
//! * [`compare`]: discriminative pair selection, simulated 2AFC observers,
//!   Thurstone Case V scaling and significance grouping.

pub mod checkpoint;
pub mod compare;
pub mod diffusion;
pub mod error;
pub mod grid;
pub mod nn;
pub mod num;
pub mod quality;
pub mod resample;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};
pub use grid::{Grid, ImageGrid};
