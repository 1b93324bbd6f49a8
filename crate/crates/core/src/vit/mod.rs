//! Vision Transformer encoder with flexible patch-size embedding.

pub mod checkpoint;
mod config;
mod encoder;
mod params;
mod patch;
mod resize;

pub use config::ViTConfig;
pub use encoder::{bind_params, ema_update, EncodedVars, Encoder, EncoderOutput};
pub use params::{Block, Head, Linear, ViTParams, Weights};
pub use patch::patchify;
pub use resize::{
    adapt_pos_embed, bilinear_weights, build_resize_matrix, pi_resize_weights, pos_resize_matrix, ResizeProjection,
};
