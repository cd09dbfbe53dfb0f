//! Low-light image enhancement by Retinex decomposition in a learned latent
//! space, combined with a conditional diffusion model.
//!
//! The pipeline: an encoder maps an image into a latent feature, a
//! decomposition network splits that feature into a content-rich reflectance
//! map and a content-free illumination map, a diffusion model restores a
//! well-lit feature under the guidance of the dark input's feature, and a
//! decoder maps the restored feature back to an image.
//!
//! Everything runs on the CPU in f64 on top of a small reverse-mode autodiff
//! kernel ([`tensor`]). Training data is synthetic paired/unpaired exposures
//! generated by [`data`].

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod numdiff;
pub mod optim;
pub mod retinex;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor};
