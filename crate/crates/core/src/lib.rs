//! Analytical UNet with scaled long skip connections, a diffusion training
//! loop, and numerical checks of the stability bounds for skip scaling.

pub mod autodiff;
pub mod checkpoint;
pub mod diffusion;
pub mod error;
pub mod experiments;
pub mod init;
pub mod linalg;
pub mod mathcheck;
pub mod optim;
pub mod plot;
pub mod rng;
pub mod scaling;
pub mod stats;
pub mod suites;
pub mod tensor;
pub mod theory;
pub mod unet;

pub use error::{Error, Result};
