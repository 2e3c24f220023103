//! Undecimated starlet (à trous) transform and a Haar DWT baseline.

mod dwt;
mod starlet;

pub use dwt::{dwt2_forward, dwt2_inverse, DwtCoefficients, DwtLevel};
pub use starlet::{
    atrous_convolve, encoder_features, mirror_index, starlet_decompose, starlet_reconstruct,
    Kernel1D, WaveletPyramid, MAX_SCALES,
};
