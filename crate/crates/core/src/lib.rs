//! À trous wavelet conditioned diffusion at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`image`]: the grayscale [`Image`] container, the seeded RNG and file I/O
//!   (PGM P5 and the `AWT1` raw tensor format).
//! - [`wavelet`]: the undecimated starlet transform used as the structural
//!   encoder, plus an orthonormal Haar DWT baseline.
//! - [`diffusion`]: noise schedules, forward corruption, reverse steps, the
//!   conditional sampler and EMA tracking.
//! - [`autodiff`]: a small reverse-mode tape over the operators the denoiser needs.
//! - [`denoiser`]: the conditional ε-predictor and its Adam optimizer.
//! - [`conditioning`]: toy text/image embedders and the cosine alignment loss.
//! - [`training`]: the training loop, datasets and checkpoints.
//! - [`metrics`]: CW-SSIM, SSIM, PSNR and the à trous vs DWT comparison.
//! - [`phantom`]: synthetic lung-ultrasound phantoms.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled (the default) and plain iterators otherwise.

pub mod autodiff;
pub mod conditioning;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod metrics;
pub mod par;
pub mod phantom;
pub mod tensor_io;
pub mod training;
pub mod wavelet;

pub use error::{Error, Result};
pub use image::{Image, SeededRng};
