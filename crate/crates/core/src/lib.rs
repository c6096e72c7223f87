//! Super-resolution of coarse-grid flood depth maps with conditional
//! denoising diffusion.

pub mod diffusion;
pub mod error;
pub mod grid;
pub mod io;
pub mod latent;
pub mod metrics;
pub mod numerics;
pub mod par;
pub mod terrain;
pub mod unet;
pub mod workflow;

pub use error::{Error, Result};
