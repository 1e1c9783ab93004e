pub mod archive;
pub mod bench;
pub mod config;
pub mod editing;
pub mod embedding;
pub mod error;
pub mod generator;
pub mod io;
pub mod latent;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod real;
pub mod refine;
pub mod scenario;
pub mod segmentation;
pub mod selfcheck;
pub mod tensor;

pub use error::{Error, Result};
