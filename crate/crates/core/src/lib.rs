//! Mask-guided, attention-refined diffusion editing of garment images.

pub mod attention;
pub mod datagen;
pub mod denoiser;
pub mod diffusion;
pub mod editor;
pub mod error;
pub mod eval;
pub mod io;
pub mod masknet;
pub mod nn;
pub mod prompt;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
