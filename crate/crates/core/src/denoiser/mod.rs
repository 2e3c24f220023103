//! The conditional noise predictor ε_θ(x_t, t, z_y, f).
//!
//! Architecture (no downsampling anywhere):
//!
//! ```text
//! [x_t ; WP(1..S)]  --stem conv-->  h            (C channels)
//! h + W_t·sin_emb(t) + b_t  --SiLU-->  h
//! h + CrossAttention(q = W_q h_p, k/v from context tokens)
//! repeat res_blocks:  h + conv(SiLU(h))
//! conv_head(SiLU(h))  -->  ε̂               (1 channel)
//! ```
//!
//! Context tokens are `[z_y ; 0 ; 0]` and, for each wavelet plane,
//! `[0 ; mean|WP_s| ; rms(WP_s)]`.

mod adam;
mod arch;
mod network;
mod params;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use arch::{ArchitectureConfig, TIME_EMBED_DIM};
pub use network::{backward, build_on_tape, context_tokens, forward, time_embedding};
pub use params::{init_params, DenoiserParams, ParamBlock};
