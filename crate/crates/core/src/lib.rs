//! Dual-branch panorama diffusion toolkit: spherical geometry, resampling,
//! cross-branch attention, a toy denoiser, room layouts and metrics.

pub mod cli;
pub mod config;
pub mod duet;
pub mod eppa;
pub mod error;
pub mod image;
pub mod layout;
pub mod metrics;
pub mod nn;
pub mod ntf;
pub mod resample;
pub mod sphere;

pub use error::{Error, Result};
