//! Layered generator abstraction: latent → per-layer styles → staged synthesis,
//! with a feature tap and injection point.

mod state;
mod toy;

pub use state::{sample_z, GeneratorState, Trace, TuneScope};
pub use toy::{
    blend, Gradients, MappingHead, ParamEntry, ParamGroup, ToyConfig, ToyGenerator, Wants, CONST_RESOLUTION,
};

use crate::error::Result;
use crate::latent::LatentCode;
use crate::real::Real;
use crate::tensor::{DomainMask, FeatureMap, Image};

/// The contract an external generator (for example a converted StyleGAN2
/// checkpoint) has to satisfy to be driven by the refinement pipeline.
///
/// The toy generator implements it; real-checkpoint loaders plug in here.
pub trait LayeredGenerator<T: Real> {
    fn n_layers(&self) -> usize;
    fn d_latent(&self) -> usize;
    /// Spatial size of each style-consuming layer's output.
    fn layer_resolutions(&self) -> Vec<usize>;
    fn output_resolution(&self) -> usize;
    fn synthesize(&self, w: &LatentCode<T>) -> Result<Image<T>>;
    fn tap(&self, w: &LatentCode<T>, layer: usize) -> Result<FeatureMap<T>>;
    fn inject(&self, w: &LatentCode<T>, f: &FeatureMap<T>, m_feat: &DomainMask) -> Result<Image<T>>;
}

impl<T: Real> LayeredGenerator<T> for GeneratorState<T> {
    fn n_layers(&self) -> usize {
        GeneratorState::n_layers(self)
    }

    fn d_latent(&self) -> usize {
        GeneratorState::d_latent(self)
    }

    fn layer_resolutions(&self) -> Vec<usize> {
        GeneratorState::layer_resolutions(self)
    }

    fn output_resolution(&self) -> usize {
        GeneratorState::output_resolution(self)
    }

    fn synthesize(&self, w: &LatentCode<T>) -> Result<Image<T>> {
        GeneratorState::synthesize(self, w)
    }

    fn tap(&self, w: &LatentCode<T>, layer: usize) -> Result<FeatureMap<T>> {
        self.tap_layer(w, layer)
    }

    fn inject(&self, w: &LatentCode<T>, f: &FeatureMap<T>, m_feat: &DomainMask) -> Result<Image<T>> {
        self.synthesize_with_injection(w, f, m_feat)
    }
}
