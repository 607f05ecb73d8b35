//! Core library for a two-stage 3D latent-diffusion image-to-image
//! translation pipeline: a from-scratch reverse-mode autodiff engine,
//! a vector-quantized compression autoencoder, multi-switchable SPADE
//! latent restyling, a modality-conditioned latent DDPM, volume metrics,
//! and a deterministic synthetic phantom generator.

pub mod ae;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod modality;
pub mod nifti;
pub mod nn;
pub mod optim;
pub mod params;
pub mod phantom;
pub mod pipeline;
pub mod plot;
pub mod spade;
pub mod tensor;
pub mod train;
pub mod unet3d;
pub mod volume;

pub use error::{Result, VoxError};
pub use modality::ModalityRegistry;
pub use params::{Bank, ParamStore, Session};
pub use tensor::{Array, ArrayF, Element, Graph, TensorId};
