//! Noise prediction `ε(x_t, t, c)`.
//!
//! [`GaussianMixtureModel`] gives the exact noise estimate for
//! mixture-distributed data and serves as the reference predictor.
//! [`tiny::TinyDenoiser`] is a small trainable convolutional stand-in.

mod gmm;
pub mod tiny;

pub use gmm::{
    analytic_eps, log_density, ConditionClass, Factorization, GaussianMixtureModel,
    GmmComponentSpec, GmmPredictor, GmmSpec,
};
pub use tiny::{train_tiny_denoiser, TinyDenoiser, TinyTrainConfig, TinyTrainReport};

use crate::error::Result;
use crate::prompt::PromptEmbedding;
use crate::tensor::LatentImage;

/// `ε(x_t, t, c)`; `t` is a raw timestep.
pub trait NoisePredictor: Send + Sync {
    fn predict(
        &self,
        x_t: &LatentImage,
        t: usize,
        cond: Option<&PromptEmbedding>,
    ) -> Result<LatentImage>;
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn predict(
        &self,
        x_t: &LatentImage,
        t: usize,
        cond: Option<&PromptEmbedding>,
    ) -> Result<LatentImage> {
        (**self).predict(x_t, t, cond)
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for std::sync::Arc<P> {
    fn predict(
        &self,
        x_t: &LatentImage,
        t: usize,
        cond: Option<&PromptEmbedding>,
    ) -> Result<LatentImage> {
        (**self).predict(x_t, t, cond)
    }
}
