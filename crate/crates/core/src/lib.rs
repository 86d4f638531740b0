//! Plug-and-play ADMM reconstruction for 2D emission tomography.
//!
//! The pipeline: simulate Poisson projection data from ellipse phantoms
//! ([`sim`]), reconstruct baselines with MLEM/OSEM ([`recon`]), train a
//! residual CNN denoiser with an optional Jacobian spectral-norm penalty
//! ([`net`], [`train`]), then alternate a penalized-likelihood proximal step
//! ([`prox`]) with the denoiser inside ADMM ([`admm`]). The [`cli`] module
//! drives the whole experiment from a config file.

pub mod admm;
pub mod cli;
pub mod config;
pub mod error;
pub mod image;
pub mod net;
pub mod prox;
pub mod recon;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
pub use image::{Image, Sinogram};
