//! Twin experiments on the Lorenz96 system comparing a 32-member LETKF with
//! a single simulation corrected by diffusion-generated pseudo ensembles.
//!
//! The pieces, bottom-up:
//!
//! - [`lorenz96`]: the model and its RK4 integrator
//! - [`observation`]: sparse noisy observations and the conditioning vector
//! - [`dataset`]: training pairs and the global normalizer
//! - [`nn`]: the 1D U-Net noise predictor, hand-written gradients and Adam
//! - [`diffusion`]: schedule, samplers, training, ensemble generation
//! - [`letkf`]: the localized ensemble transform analysis
//! - [`assimilation`]: the two DA loops and RMSE diagnostics
//! - [`harness`]: sweeps, Hovmöller export, run manifests
//!
//! ```
//! use genda::lorenz96::{simulate, ModelConfig, StateVector};
//!
//! let cfg = ModelConfig::default();
//! let traj = simulate(&StateVector::constant(40, 8.0), &cfg, 3, 0).unwrap();
//! assert!(traj.iter().all(|s| s.as_slice().iter().all(|&u| u == 8.0)));
//! ```

pub mod assimilation;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod letkf;
pub mod lorenz96;
pub mod nn;
pub mod observation;

pub use error::{Error, Result};

/// The guide in `book/src`, compiled so its examples stay in sync.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/lorenz96.md")]
    mod lorenz96 {}
    #[doc = include_str!("../../../book/src/observations.md")]
    mod observations {}
    #[doc = include_str!("../../../book/src/denoiser.md")]
    mod denoiser {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    mod diffusion {}
    #[doc = include_str!("../../../book/src/letkf.md")]
    mod letkf {}
    #[doc = include_str!("../../../book/src/assimilation.md")]
    mod assimilation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
