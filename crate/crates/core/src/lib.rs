pub mod checkpoint;
pub mod classifier;
pub mod cli;
pub mod dataio;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod nn;
pub mod perturb;
pub mod quality;
pub mod saliency;
pub mod schedules;
pub mod sfs;

pub use error::{Error, Result};
